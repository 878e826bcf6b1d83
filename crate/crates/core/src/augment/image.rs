//! Image transforms on single `C x H x W` images with values in `[0, 1]`.

use ndarray::{Array3, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Crops the `side x side` square at `(top, left)` and resizes it back to the
/// full size with corner-aligned bilinear interpolation.
pub fn crop_resize(img: ArrayView3<f64>, top: usize, left: usize, side: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    assert!(
        side >= 1 && top + side <= h && left + side <= w,
        "crop outside image"
    );
    let coord = |i: usize, out: usize| -> (usize, usize, f64) {
        if out <= 1 || side == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (side - 1) as f64 / (out - 1) as f64;
        let lo = (pos.floor() as usize).min(side - 1);
        let hi = (lo + 1).min(side - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        let (y0, y1, wy) = coord(y, h);
        for x in 0..w {
            let (x0, x1, wx) = coord(x, w);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| img[[ch, top + yy, left + xx]];
                let v = if wy == 0.0 && wx == 0.0 {
                    p(y0, x0)
                } else {
                    let a = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                    let b = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                    a * (1.0 - wy) + b * wy
                };
                out[[ch, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Square crop geometry for an `s x s` image at area fraction drawn from `scale`.
pub fn sample_crop(
    s: usize,
    scale: (f64, f64),
    rng: &mut impl Rng,
) -> Result<(usize, usize, usize)> {
    let (lo, hi) = scale;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::param(
            "resize_crop.scale",
            format!("need 0 < lo <= hi <= 1, got ({lo}, {hi})"),
        ));
    }
    if lo.sqrt() * (s as f64) < 1.0 {
        return Err(Error::param(
            "resize_crop.scale",
            format!("area fraction {lo} gives a crop smaller than 1 pixel on a {s}x{s} image"),
        ));
    }
    let area = lo + (hi - lo) * rng.random::<f64>();
    let side = ((area.sqrt() * s as f64).round() as usize).clamp(1, s);
    let top = rng.random_range(0..=s - side);
    let left = rng.random_range(0..=s - side);
    Ok((top, left, side))
}

pub fn resize_crop(
    img: ArrayView3<f64>,
    scale: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Array3<f64>> {
    let (_, h, w) = img.dim();
    if h != w {
        return Err(Error::param(
            "resize_crop",
            format!("image must be square, got {h}x{w}"),
        ));
    }
    let (top, left, side) = sample_crop(h, scale, rng)?;
    Ok(crop_resize(img, top, left, side))
}

pub fn flip_columns(img: ArrayView3<f64>) -> Array3<f64> {
    let mut out = img.to_owned();
    out.invert_axis(Axis(2));
    out.as_standard_layout().to_owned()
}

pub fn horizontal_flip(img: ArrayView3<f64>, p: f64, rng: &mut impl Rng) -> Array3<f64> {
    if rng.random::<f64>() < p {
        flip_columns(img)
    } else {
        img.to_owned()
    }
}

fn luma_at(img: &Array3<f64>, y: usize, x: usize) -> f64 {
    let (r, g, b) = (img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]);
    if r == g && g == b {
        r
    } else {
        LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
    }
}

/// Brightness, then contrast, then saturation with explicit multipliers;
/// the result is clamped to `[0, 1]` after each stage. A multiplier of
/// exactly 1 skips its stage.
pub fn jitter_with(
    img: ArrayView3<f64>,
    brightness: f64,
    contrast: f64,
    saturation: f64,
) -> Array3<f64> {
    let mut out = img.to_owned();
    let (c, h, w) = out.dim();
    if brightness != 1.0 {
        out.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let mean = if c == 3 {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += luma_at(&out, y, x);
                }
            }
            s / (h * w) as f64
        } else {
            out.mean().unwrap_or(0.0)
        };
        out.mapv_inplace(|v| ((v - mean) * contrast + mean).clamp(0.0, 1.0));
    }
    if saturation != 1.0 && c == 3 {
        for y in 0..h {
            for x in 0..w {
                let g = luma_at(&out, y, x);
                for ch in 0..3 {
                    let v = out[[ch, y, x]];
                    out[[ch, y, x]] = ((v - g) * saturation + g).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

pub fn check_jitter_strength(strength: f64) -> Result<()> {
    if !(0.0..1.0).contains(&strength) {
        return Err(Error::param(
            "color_jitter.strength",
            format!("must lie in [0, 1), got {strength}"),
        ));
    }
    Ok(())
}

/// Multipliers drawn uniformly from `[1 - strength, 1 + strength]`.
pub fn sample_jitter(strength: f64, rng: &mut impl Rng) -> Result<(f64, f64, f64)> {
    check_jitter_strength(strength)?;
    let mut draw = || {
        let u = rng.random::<f64>();
        if strength == 0.0 {
            1.0
        } else {
            1.0 - strength + 2.0 * strength * u
        }
    };
    Ok((draw(), draw(), draw()))
}

pub fn color_jitter(
    img: ArrayView3<f64>,
    strength: f64,
    rng: &mut impl Rng,
) -> Result<Array3<f64>> {
    let (b, c, s) = sample_jitter(strength, rng)?;
    Ok(jitter_with(img, b, c, s))
}

/// Replaces every channel by the luma of the RGB triple. Non-RGB images pass through.
pub fn to_gray(img: ArrayView3<f64>) -> Array3<f64> {
    let mut out = img.to_owned();
    let (c, h, w) = out.dim();
    if c != 3 {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            let g = luma_at(&out, y, x);
            for ch in 0..3 {
                out[[ch, y, x]] = g;
            }
        }
    }
    out
}

pub fn grayscale(img: ArrayView3<f64>, p: f64, rng: &mut impl Rng) -> Array3<f64> {
    if rng.random::<f64>() < p {
        to_gray(img)
    } else {
        img.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, s: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, s, s), |_| rng.random::<f64>())
    }

    #[test]
    fn full_scale_crop_is_identity() {
        let img = random_image(3, 8, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(resize_crop(img.view(), (1.0, 1.0), &mut rng).unwrap(), img);
    }

    #[test]
    fn single_pixel_crop_resizes_to_constant() {
        let img = array![[[0.1, 0.2], [0.3, 0.4]]];
        let out = crop_resize(img.view(), 0, 0, 1);
        assert_eq!(out, array![[[0.1, 0.1], [0.1, 0.1]]]);
    }

    #[test]
    fn bilinear_midpoint_by_hand() {
        // 3x3 output from a 2x2 crop: centre is the mean of the four corners
        let img = array![[[0.0, 0.2, 0.9], [0.4, 0.6, 0.9], [0.9, 0.9, 0.9]]];
        let out = crop_resize(img.view(), 0, 0, 2);
        assert!((out[[0, 1, 1]] - 0.3).abs() < 1e-12);
        assert!((out[[0, 0, 1]] - 0.1).abs() < 1e-12);
        assert_eq!(out[[0, 2, 2]], 0.6);
    }

    #[test]
    fn crop_rejects_subpixel_and_keeps_shape() {
        let img = random_image(3, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(resize_crop(img.view(), (0.01, 1.0), &mut rng).is_err());
        for _ in 0..50 {
            let out = resize_crop(img.view(), (0.2, 1.0), &mut rng).unwrap();
            assert_eq!(out.dim(), img.dim());
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn flip_cases() {
        let img = array![[[0.25, 0.75]]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(horizontal_flip(img.view(), 0.0, &mut rng), img);
        assert_eq!(flip_columns(img.view()), array![[[0.75, 0.25]]]);
        let big = random_image(3, 5, 9);
        assert_eq!(flip_columns(flip_columns(big.view()).view()), big);
    }

    #[test]
    fn jitter_cases() {
        let img = random_image(3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(color_jitter(img.view(), 0.0, &mut rng).unwrap(), img);
        assert!(color_jitter(img.view(), 1.0, &mut rng).is_err());
        let one = array![[[0.25]]];
        assert_eq!(jitter_with(one.view(), 2.0, 1.0, 1.0), array![[[0.5]]]);
        for _ in 0..20 {
            let out = color_jitter(img.view(), 0.9, &mut rng).unwrap();
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn grayscale_cases() {
        let red = array![[[1.0]], [[0.0]], [[0.0]]];
        let g = to_gray(red.view());
        assert!(g.iter().all(|&v| (v - 0.299).abs() < 1e-15));
        let gray = array![[[0.3, 0.7]], [[0.3, 0.7]], [[0.3, 0.7]]];
        assert_eq!(to_gray(gray.view()), gray);
        let img = random_image(3, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let once = grayscale(img.view(), 1.0, &mut rng);
        assert_eq!(grayscale(once.view(), 1.0, &mut rng), once);
    }
}
