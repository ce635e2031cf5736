//! Image fidelity metrics.

use crate::error::{Error, Result};
use crate::image::Image;

/// Ceiling reported for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_shapes(a: &Image, b: &Image, what: &str) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::Dimension(format!(
            "{what}: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b, "mse")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `-10·log10(MSE)` for unit-range images, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP_DB
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP_DB)
    }
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// "Valid" separable filtering of a single-channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Single-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// every valid window position and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b, "ssim")?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, _, _) = filter_valid(&x, w, h, &taps);
        let (my, _, _) = filter_valid(&y, w, h, &taps);
        let (sxx, _, _) = filter_valid(&xx, w, h, &taps);
        let (syy, _, _) = filter_valid(&yy, w, h, &taps);
        let (sxy, ow, oh) = filter_valid(&xy, w, h, &taps);
        let mut acc = 0.0;
        for i in 0..ow * oh {
            let (mx, my) = (mx[i], my[i]);
            let vx = sxx[i] - mx * mx;
            let vy = syy[i] - my * my;
            let cov = sxy[i] - mx * my;
            acc += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
        }
        total += acc / (ow * oh) as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    /// Direct double loop over window positions and the full 2D Gaussian.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let taps = gaussian_taps(11, 1.5);
        let (w, h) = (a.width(), a.height());
        let mut total = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            let mut count = 0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..11 {
                        for i in 0..11 {
                            let g = taps[i] * taps[j];
                            let p = a.pixel(x0 + i, y0 + j)[c] as f64;
                            let q = b.pixel(x0 + i, y0 + j)[c] as f64;
                            mx += g * p;
                            my += g * q;
                            sxx += g * p * p;
                            syy += g * q * q;
                            sxy += g * p * q;
                        }
                    }
                    let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    acc += ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                        / ((mx * mx + my * my + C1) * (vx + vy + C2));
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / 3.0
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random_image(1, 12, 12);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let z = Image::filled(4, 4, [0.0; 3]);
        let o = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        let b = random_image(2, 12, 12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &z).is_err());
    }

    #[test]
    fn ssim_identity_and_negation() {
        let a = random_image(3, 16, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let neg = Image::from_fn(16, 16, |x, y| {
            let p = a.pixel(x, y);
            [1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]
        });
        assert!(ssim(&a, &neg).unwrap() < 1.0);
    }

    #[test]
    fn ssim_matches_double_loop_reference() {
        let a = random_image(5, 16, 16);
        let b = random_image(6, 16, 16);
        let fast = ssim(&a, &b).unwrap();
        let slow = ssim_reference(&a, &b);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random_image(1, 10, 16);
        assert!(ssim(&a, &a).is_err());
    }
}
