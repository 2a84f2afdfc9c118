//! Image quality metrics: PSNR and SSIM over [0,1] RGB images.

use crate::error::{Error, Result};
use crate::raster::Image;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::DimensionMismatch(
            a.width, a.height, b.width, b.height,
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB: `10 log10(1 / MSE)` with MSE taken
/// over all pixels and channels. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let mut acc = 0.0f64;
    for (pa, pb) in a.pixels().iter().zip(b.pixels()) {
        for i in 0..3 {
            let d = pa[i] - pb[i];
            acc += d * d;
        }
    }
    let mse = acc / (a.pixels().len() as f64 * 3.0);
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Rec. 709 luma used by [`ssim`].
pub fn luma(px: [f64; 3]) -> f64 {
    0.2126 * px[0] + 0.7152 * px[1] + 0.0722 * px[2]
}

fn gaussian_kernel_11() -> [f64; 11] {
    let sigma = 1.5f64;
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1. Computed on Rec. 709 luma, over
/// every pixel whose full window fits inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < 11 || h < 11 {
        return Err(Error::DimensionMismatch(a.width, a.height, 11, 11));
    }
    let ya: Vec<f64> = a.pixels().iter().map(|&p| luma(p)).collect();
    let yb: Vec<f64> = b.pixels().iter().map(|&p| luma(p)).collect();
    let k = gaussian_kernel_11();

    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in 5..h - 5 {
        for cx in 5..w - 5 {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..11 {
                for dx in 0..11 {
                    let wgt = k[dy] * k[dx];
                    let idx = (cy + dy - 5) * w + (cx + dx - 5);
                    let (va, vb) = (ya[idx], yb[idx]);
                    mu_a += wgt * va;
                    mu_b += wgt * vb;
                    aa += wgt * va * va;
                    bb += wgt * vb * vb;
                    ab += wgt * va * vb;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: u32, h: u32, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Image::new(w, h);
        for px in img.pixels_mut() {
            *px = [rng.gen(), rng.gen(), rng.gen()];
        }
        img
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = random_image(16, 16, 1);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    #[test]
    fn psnr_uniform_offset_is_20db() {
        let a = Image::filled(8, 8, [0.0; 3]);
        let b = Image::filled(8, 8, [0.1; 3]);
        let v = psnr(&a, &b).unwrap();
        assert!((v - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_direct_formula_and_is_symmetric() {
        let a = random_image(12, 9, 2);
        let b = random_image(12, 9, 3);
        let v = psnr(&a, &b).unwrap();
        let mut acc = 0.0;
        for (pa, pb) in a.pixels().iter().zip(b.pixels()) {
            for i in 0..3 {
                acc += (pa[i] - pb[i]).powi(2);
            }
        }
        let want = -10.0 * (acc / (12.0 * 9.0 * 3.0)).log10();
        assert!((v - want).abs() < 1e-12);
        assert_eq!(v, psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_rejects_mismatched_dims() {
        let a = random_image(8, 8, 1);
        let b = random_image(8, 9, 1);
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_image(24, 24, 4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_negative_image_is_negative() {
        let a = random_image(24, 24, 5);
        let mut b = a.clone();
        for px in b.pixels_mut() {
            *px = [1.0 - px[0], 1.0 - px[1], 1.0 - px[2]];
        }
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_sliding_window_oracle() {
        let a = random_image(20, 15, 6);
        let b = random_image(20, 15, 7);
        let got = ssim(&a, &b).unwrap();

        // Independent recomputation, plain loops over each window.
        let k = gaussian_kernel_11();
        let mut vals = Vec::new();
        for cy in 5..15 - 5 {
            for cx in 5..20 - 5 {
                let mut stats = [0.0f64; 5];
                for dy in -5i32..=5 {
                    for dx in -5i32..=5 {
                        let wgt = k[(dy + 5) as usize] * k[(dx + 5) as usize];
                        let va = luma(a.get((cx + dx) as u32, (cy + dy) as u32));
                        let vb = luma(b.get((cx + dx) as u32, (cy + dy) as u32));
                        stats[0] += wgt * va;
                        stats[1] += wgt * vb;
                        stats[2] += wgt * va * va;
                        stats[3] += wgt * vb * vb;
                        stats[4] += wgt * va * vb;
                    }
                }
                let (mu_a, mu_b) = (stats[0], stats[1]);
                let var_a = stats[2] - mu_a * mu_a;
                let var_b = stats[3] - mu_b * mu_b;
                let cov = stats[4] - mu_a * mu_b;
                let c1 = 0.0001;
                let c2 = 0.0009;
                vals.push(
                    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)),
                );
            }
        }
        let want = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((got - want).abs() < 1e-12);
    }
}
